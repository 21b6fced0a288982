//! Verification scoring and the full evaluation protocol matrix.
//!
//! A scorer embeds signatures once, then every protocol cell (1 or 4
//! templates, skilled or random forgeries) reuses those embeddings. Scores
//! are alignment distances between embedded sequences, aggregated over the
//! template set; lower means more genuine. Equal error rates are computed
//! under a single pooled threshold (global) and per-user thresholds (local).


use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::dtw_distance;
use crate::autodiff::ParameterStore;
use crate::config::{Aggregation, EerInterpolation};
use crate::datagen::{Dataset, LoadedSig};
use crate::error::{Error, Result};
use crate::model::NetworkConfig;
use crate::pipeline::{embed_value, prepare_signature};
use crate::rng;

/// Maps a raw capture to the sequence embedding used for scoring.
pub trait Embedder: Sync {
    fn embed(&self, sig: &LoadedSig) -> Result<Array2<f64>>;
    /// Short name recorded in report provenance.
    fn name(&self) -> &'static str;
}

/// The trained network.
pub struct ModelEmbedder<'a> {
    pub config: &'a NetworkConfig,
    pub params: &'a ParameterStore,
}

impl Embedder for ModelEmbedder<'_> {
    fn embed(&self, sig: &LoadedSig) -> Result<Array2<f64>> {
        let prepared = prepare_signature(&sig.raw, self.config)?;
        Ok(embed_value(&prepared, self.config, self.params))
    }

    fn name(&self) -> &'static str {
        "model"
    }
}

/// Reference scorer: the prepared node features themselves, no learned
/// parameters. The untrained baseline every trained model must beat.
pub struct FeatureEmbedder {
    pub config: NetworkConfig,
}

impl Embedder for FeatureEmbedder {
    fn embed(&self, sig: &LoadedSig) -> Result<Array2<f64>> {
        Ok(prepare_signature(&sig.raw, &self.config)?.features)
    }

    fn name(&self) -> &'static str {
        "feature_dtw"
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForgeryType {
    Skilled,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    Global,
    Local,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateStrategy {
    /// The first n genuine signatures in capture order.
    FirstN,
    /// Random template draws repeated `runs` times; the reported rate is the
    /// minimum across draws.
    RandomMinOver { runs: usize },
}

impl TemplateStrategy {
    pub fn runs(&self) -> usize {
        match self {
            TemplateStrategy::FirstN => 1,
            TemplateStrategy::RandomMinOver { runs } => *runs,
        }
    }
}

/// The dagger protocol's draw count.
pub const RANDOM_TEMPLATE_RUNS: usize = 20;

/// One evaluation cell selector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub templates_per_user: usize,
    pub forgery_type: ForgeryType,
    pub threshold_mode: ThresholdMode,
    pub template_strategy: TemplateStrategy,
}

/// Selects template indices into a user's genuine pool.
pub fn select_templates(
    user: &crate::datagen::UserData,
    strategy: TemplateStrategy,
    n: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if user.genuine.len() < n {
        return Err(Error::InsufficientData(format!(
            "user {} has {} genuine signatures, needs {n} templates",
            user.user_id,
            user.genuine.len()
        )));
    }
    match strategy {
        TemplateStrategy::FirstN => Ok((0..n).collect()),
        TemplateStrategy::RandomMinOver { .. } => {
            let mut r = rng::stream(seed);
            let mut picked = rng::sample_indices(&mut r, user.genuine.len(), n);
            picked.sort_unstable();
            Ok(picked)
        }
    }
}

/// Equal error rate under the midpoint sweep convention.
///
/// Candidate thresholds are the sorted union of all scores plus midpoints
/// between consecutive distinct values. `FRR(t)` is the fraction of genuine
/// scores above `t`, `FAR(t)` the fraction of impostor scores at or below
/// `t`. The selected threshold minimizes `|FAR - FRR|`; ties prefer the
/// smaller reported rate `(FAR + FRR) / 2`, then the lower threshold.
/// Returns `(eer, threshold)` with the rate as a fraction in `[0, 1]`.
pub fn compute_eer(genuine: &[f64], impostor: &[f64]) -> (f64, f64) {
    compute_eer_with(genuine, impostor, EerInterpolation::Midpoint)
}

pub fn compute_eer_with(
    genuine: &[f64],
    impostor: &[f64],
    interpolation: EerInterpolation,
) -> (f64, f64) {
    assert!(
        !genuine.is_empty() && !impostor.is_empty(),
        "equal error rate needs both score lists non-empty"
    );
    let mut values: Vec<f64> = genuine.iter().chain(impostor.iter()).copied().collect();
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values.dedup();
    let mut candidates = Vec::with_capacity(2 * values.len());
    for (i, &v) in values.iter().enumerate() {
        candidates.push(v);
        if i + 1 < values.len() {
            candidates.push(0.5 * (v + values[i + 1]));
        }
    }
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());

    // The selection compares |FAR - FRR| and (FAR + FRR)/2 exactly via
    // integer cross-multiplication of the acceptance/rejection counts, so
    // ties behave as they do on paper.
    let (ng, ni) = (genuine.len() as u64, impostor.len() as u64);
    let counts = |t: f64| -> (u64, u64) {
        let cg = genuine.iter().filter(|&&s| s > t).count() as u64;
        let ci = impostor.iter().filter(|&&s| s <= t).count() as u64;
        (cg, ci)
    };

    let mut best: Option<(u64, u64, f64)> = None;
    for &t in &candidates {
        let (cg, ci) = counts(t);
        let gap = (ci * ng).abs_diff(cg * ni);
        let sum = ci * ng + cg * ni;
        let cand = (gap, sum, t);
        let better = match best {
            None => true,
            Some(b) => cand.0 < b.0 || (cand.0 == b.0 && (cand.1, cand.2) < (b.1, b.2)),
        };
        if better {
            best = Some(cand);
        }
    }
    let (_, sum, thr) = best.unwrap();
    let eer = sum as f64 / (2 * ng * ni) as f64;

    if interpolation == EerInterpolation::Linear {
        // locate the sign change of FAR - FRR and interpolate the crossing
        let mut prev: Option<(f64, f64, f64)> = None;
        for &t in &candidates {
            let (far, frr) = rates(t);
            let diff = far - frr;
            if let Some((pt, pdiff, peer)) = prev {
                if pdiff < 0.0 && diff >= 0.0 || pdiff > 0.0 && diff <= 0.0 {
                    let w = pdiff.abs() / (pdiff.abs() + diff.abs()).max(1e-300);
                    let eer_here = 0.5 * (far + frr);
                    return (peer + w * (eer_here - peer), pt + w * (t - pt));
                }
            }
            prev = Some((t, diff, 0.5 * (far + frr)));
        }
    }
    (eer, thr)
}

/// Aggregated template-to-probe score; lower is more genuine.
fn aggregate(distances: &[f64], aggregation: Aggregation) -> f64 {
    match aggregation {
        Aggregation::Mean => distances.iter().sum::<f64>() / distances.len() as f64,
        Aggregation::Min => distances.iter().copied().fold(f64::INFINITY, f64::min),
    }
}

/// Embeds templates and probe and scores the probe against the template set.
pub fn verification_score<E: Embedder>(
    embedder: &E,
    templates: &[&LoadedSig],
    probe: &LoadedSig,
    aggregation: Aggregation,
) -> Result<f64> {
    if templates.is_empty() {
        return Err(Error::InsufficientData("empty template list".into()));
    }
    let probe_emb = embedder.embed(probe)?;
    let mut distances = Vec::with_capacity(templates.len());
    for t in templates {
        let temb = embedder.embed(t)?;
        distances.push(dtw_distance(&temb, &probe_emb).normalized);
    }
    Ok(aggregate(&distances, aggregation))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UserEer {
    pub user_id: String,
    pub eer_percent: f64,
    pub threshold: f64,
    pub n_genuine: usize,
    pub n_impostor: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreRow {
    pub user_id: String,
    pub probe_id: String,
    /// genuine, skilled_forgery, or random_forgery
    pub label: String,
    pub score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkippedUser {
    pub user_id: String,
    pub reason: String,
}

/// Both threshold modes of one (templates, forgery) cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellReport {
    pub templates_per_user: usize,
    pub forgery_type: ForgeryType,
    pub template_strategy: TemplateStrategy,
    pub eer_global_percent: f64,
    pub threshold_global: f64,
    /// Mean of per-user equal error rates.
    pub eer_local_percent: f64,
    pub per_user: Vec<UserEer>,
    /// Number of template draws evaluated (1 for first-n).
    pub template_draws: usize,
    /// Global EER of every draw, percent; the reported cell is the minimum.
    pub draw_eers_global: Vec<f64>,
    pub skipped: Vec<SkippedUser>,
    /// Scores of the reported draw.
    pub scores: Vec<ScoreRow>,
}

/// Report provenance: enough to reproduce the run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub scorer: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub provenance: Provenance,
    pub cells: Vec<CellReport>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }

    /// Companion CSV: `templates,forgery,user,probe_id,label,score`.
    pub fn scores_csv(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::from("templates,forgery,user,probe_id,label,score\n");
        for cell in &self.cells {
            let forgery = match cell.forgery_type {
                ForgeryType::Skilled => "skilled",
                ForgeryType::Random => "random",
            };
            for row in &cell.scores {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    cell.templates_per_user, forgery, row.user_id, row.probe_id, row.label, row.score
                );
            }
        }
        out
    }

    /// The console matrix in `EER_g/EER_l` percent form.
    pub fn console_matrix(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::new();
        let _ = writeln!(out, "{:<28}{}", "protocol", "EER_g/EER_l");
        for cell in &self.cells {
            let forgery = match cell.forgery_type {
                ForgeryType::Skilled => "skilled",
                ForgeryType::Random => "random",
            };
            let strategy = match cell.template_strategy {
                TemplateStrategy::FirstN => "",
                TemplateStrategy::RandomMinOver { .. } => " (random templates)",
            };
            let _ = writeln!(
                out,
                "{:<28}{:.2}/{:.2}",
                format!("{} {}vs1{}", forgery, cell.templates_per_user, strategy),
                cell.eer_global_percent,
                cell.eer_local_percent
            );
        }
        out
    }
}

/// Embeddings of every test-split signature, computed once.
pub struct EvalContext<'a> {
    dataset: &'a Dataset,
    test_users: Vec<usize>,
    genuine_emb: Vec<Vec<Array2<f64>>>,
    skilled_emb: Vec<Vec<Array2<f64>>>,
    pub aggregation: Aggregation,
    pub interpolation: EerInterpolation,
}

impl<'a> EvalContext<'a> {
    pub fn new<E: Embedder>(
        embedder: &E,
        dataset: &'a Dataset,
        aggregation: Aggregation,
        interpolation: EerInterpolation,
        workers: usize,
    ) -> Result<Self> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        let test_users = dataset.test_users();
        if test_users.is_empty() {
            return Err(Error::InsufficientData("dataset has no test users".into()));
        }
        let mut genuine_emb = vec![Vec::new(); dataset.users.len()];
        let mut skilled_emb = vec![Vec::new(); dataset.users.len()];
        for &u in &test_users {
            let user = &dataset.users[u];
            genuine_emb[u] = pool.install(|| {
                user.genuine
                    .par_iter()
                    .map(|s| embedder.embed(s))
                    .collect::<Result<Vec<_>>>()
            })?;
            skilled_emb[u] = pool.install(|| {
                user.skilled
                    .par_iter()
                    .map(|s| embedder.embed(s))
                    .collect::<Result<Vec<_>>>()
            })?;
        }
        Ok(EvalContext {
            dataset,
            test_users,
            genuine_emb,
            skilled_emb,
            aggregation,
            interpolation,
        })
    }

    fn score(&self, templates: &[&Array2<f64>], probe: &Array2<f64>) -> f64 {
        let distances: Vec<f64> = templates
            .iter()
            .map(|t| dtw_distance(t, probe).normalized)
            .collect();
        aggregate(&distances, self.aggregation)
    }

    /// Scores one template draw of one cell. Returns per-user score lists.
    fn score_draw(
        &self,
        n_templates: usize,
        forgery: ForgeryType,
        strategy: TemplateStrategy,
        draw_seed: u64,
    ) -> Result<(Vec<(usize, Vec<ScoreRow>, Vec<f64>, Vec<f64>)>, Vec<SkippedUser>)> {
        let mut per_user = Vec::new();
        let mut skipped = Vec::new();
        for &u in &self.test_users {
            let user = &self.dataset.users[u];
            if user.genuine.len() < n_templates + 1 {
                skipped.push(SkippedUser {
                    user_id: user.user_id.clone(),
                    reason: format!(
                        "{} genuine signatures cannot supply {n_templates} templates plus a probe",
                        user.genuine.len()
                    ),
                });
                continue;
            }
            if forgery == ForgeryType::Skilled && user.skilled.is_empty() {
                skipped.push(SkippedUser {
                    user_id: user.user_id.clone(),
                    reason: "no skilled forgeries".into(),
                });
                continue;
            }
            let template_seed = rng::derive_seed(draw_seed, "templates", &[u as u64]);
            let template_ix = select_templates(user, strategy, n_templates, template_seed)?;
            let templates: Vec<&Array2<f64>> =
                template_ix.iter().map(|&i| &self.genuine_emb[u][i]).collect();

            let mut rows = Vec::new();
            let mut genuine_scores = Vec::new();
            let mut impostor_scores = Vec::new();
            for (i, sig) in user.genuine.iter().enumerate() {
                if template_ix.contains(&i) {
                    continue;
                }
                let s = self.score(&templates, &self.genuine_emb[u][i]);
                genuine_scores.push(s);
                rows.push(ScoreRow {
                    user_id: user.user_id.clone(),
                    probe_id: sig.sig_id.clone(),
                    label: "genuine".into(),
                    score: s,
                });
            }
            match forgery {
                ForgeryType::Skilled => {
                    for (i, sig) in user.skilled.iter().enumerate() {
                        let s = self.score(&templates, &self.skilled_emb[u][i]);
                        impostor_scores.push(s);
                        rows.push(ScoreRow {
                            user_id: user.user_id.clone(),
                            probe_id: sig.sig_id.clone(),
                            label: "skilled_forgery".into(),
                            score: s,
                        });
                    }
                }
                ForgeryType::Random => {
                    // zero-effort impostors: other test users' genuine
                    // signatures, sampled 1:1 with this user's genuine probes
                    let mut pool_ix = Vec::new();
                    for &v in &self.test_users {
                        if v == u {
                            continue;
                        }
                        for g in 0..self.dataset.users[v].genuine.len() {
                            pool_ix.push((v, g));
                        }
                    }
                    let want = genuine_scores.len().min(pool_ix.len());
                    let mut r = rng::stream(rng::derive_seed(
                        draw_seed,
                        "random-impostors",
                        &[u as u64],
                    ));
                    for ix in rng::sample_indices(&mut r, pool_ix.len(), want) {
                        let (v, g) = pool_ix[ix];
                        let s = self.score(&templates, &self.genuine_emb[v][g]);
                        impostor_scores.push(s);
                        rows.push(ScoreRow {
                            user_id: user.user_id.clone(),
                            probe_id: format!(
                                "{}:{}",
                                self.dataset.users[v].user_id,
                                self.dataset.users[v].genuine[g].sig_id
                            ),
                            label: "random_forgery".into(),
                            score: s,
                        });
                    }
                }
            }
            per_user.push((u, rows, genuine_scores, impostor_scores));
        }
        Ok((per_user, skipped))
    }

    /// Evaluates one (templates, forgery, strategy) cell under both threshold
    /// modes. For the random-template strategy the cell reports the minimum
    /// rate over the configured number of seeded draws (global and local
    /// minimized independently); scores come from the draw minimizing the
    /// global rate.
    pub fn run_cell(
        &self,
        n_templates: usize,
        forgery: ForgeryType,
        strategy: TemplateStrategy,
        seed: u64,
    ) -> Result<CellReport> {
        let runs = strategy.runs();
        let mut best: Option<CellReport> = None;
        let mut draw_eers_global = Vec::with_capacity(runs);
        let mut best_local = f64::INFINITY;
        for run in 0..runs {
            let draw_seed = rng::derive_seed(seed, "template-draw", &[run as u64]);
            let (per_user, skipped) = self.score_draw(n_templates, forgery, strategy, draw_seed)?;
            if per_user.is_empty() {
                return Err(Error::InsufficientData(
                    "every test user was skipped; nothing to evaluate".into(),
                ));
            }
            let mut all_genuine = Vec::new();
            let mut all_impostor = Vec::new();
            let mut users = Vec::new();
            let mut rows = Vec::new();
            for (u, user_rows, genuine, impostor) in &per_user {
                all_genuine.extend_from_slice(genuine);
                all_impostor.extend_from_slice(impostor);
                if !genuine.is_empty() && !impostor.is_empty() {
                    let (eer, thr) = compute_eer_with(genuine, impostor, self.interpolation);
                    users.push(UserEer {
                        user_id: self.dataset.users[*u].user_id.clone(),
                        eer_percent: 100.0 * eer,
                        threshold: thr,
                        n_genuine: genuine.len(),
                        n_impostor: impostor.len(),
                    });
                }
                rows.extend_from_slice(user_rows);
            }
            let (eer_g, thr_g) =
                compute_eer_with(&all_genuine, &all_impostor, self.interpolation);
            let eer_local =
                users.iter().map(|u| u.eer_percent).sum::<f64>() / users.len() as f64;
            draw_eers_global.push(100.0 * eer_g);
            best_local = best_local.min(eer_local);
            let replace = match &best {
                None => true,
                Some(b) => 100.0 * eer_g < b.eer_global_percent,
            };
            if replace {
                best = Some(CellReport {
                    templates_per_user: n_templates,
                    forgery_type: forgery,
                    template_strategy: strategy,
                    eer_global_percent: 100.0 * eer_g,
                    threshold_global: thr_g,
                    eer_local_percent: eer_local,
                    per_user: users,
                    template_draws: runs,
                    draw_eers_global: Vec::new(),
                    skipped,
                    scores: rows,
                });
            }
        }
        let mut report = best.unwrap();
        report.draw_eers_global = draw_eers_global;
        report.eer_local_percent = best_local;
        Ok(report)
    }

    /// Evaluates one protocol selector to a single rate.
    pub fn run_protocol(&self, protocol: &Protocol, seed: u64) -> Result<(f64, CellReport)> {
        let cell = self.run_cell(
            protocol.templates_per_user,
            protocol.forgery_type,
            protocol.template_strategy,
            seed,
        )?;
        let eer = match protocol.threshold_mode {
            ThresholdMode::Global => cell.eer_global_percent,
            ThresholdMode::Local => cell.eer_local_percent,
        };
        Ok((eer, cell))
    }

    /// The standard four-cell matrix: skilled/random x 1vs1/4vs1.
    pub fn run_matrix(&self, strategy: TemplateStrategy, seed: u64) -> Result<Vec<CellReport>> {
        let mut cells = Vec::new();
        for forgery in [ForgeryType::Skilled, ForgeryType::Random] {
            for n in [1usize, 4] {
                cells.push(self.run_cell(n, forgery, strategy, seed)?);
            }
        }
        Ok(cells)
    }
}
