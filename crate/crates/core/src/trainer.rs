//! Deterministic optimization loop with checkpointing.
//!
//! One author per step. Per-signature forward and backward passes may run on
//! parallel workers; each signature owns its tape, the loss ties the
//! embeddings together on a separate tape, and gradient accumulation runs in
//! a fixed order, so traces and checkpoints are bit-identical for any worker
//! count. Sampling and shuffling derive from `(seed, epoch, step)`, which
//! also makes checkpoint resume exact.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::autodiff::{Cursor, ParameterStore, Tape, Var};
use crate::config::RunConfig;
use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::model::init_parameters;
use crate::objective::{author_loss, sample_triplets, EmbeddedBatch, TripletBatch};
use crate::pipeline::{embed, prepare_signature, Embedded, PreparedSignature};
use crate::rng;

/// Adam accumulators plus hyperparameters, flat over the parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(flat_len: usize, lr: f64) -> Self {
        OptimizerState {
            m: vec![0.0; flat_len],
            v: vec![0.0; flat_len],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Scales gradients in place so their global norm is at most `clip`.
/// Returns the norm after clipping.
pub fn clip_global_norm(grads: &mut [f64], clip: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > clip && norm > 0.0 {
        let s = clip / norm;
        for g in grads.iter_mut() {
            *g *= s;
        }
        clip
    } else {
        norm
    }
}

/// One bias-corrected adaptive-moment update over the trainable parameters.
///
/// Non-finite gradients abort without touching the parameters.
pub fn optimizer_step(
    params: &mut ParameterStore,
    grads: &[f64],
    state: &mut OptimizerState,
) -> Result<()> {
    assert_eq!(grads.len(), params.flat_len(), "gradient length mismatch");
    if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient at {} is {}",
            params.coord_name(bad),
            grads[bad]
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let mut flat = params.flatten();
    let mut off = 0usize;
    for entry in params.entries() {
        let len = entry.value.len();
        if entry.trainable {
            for i in off..off + len {
                let g = grads[i];
                state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
                state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
                let m_hat = state.m[i] / bc1;
                let v_hat = state.v[i] / bc2;
                flat[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
            }
        }
        off += len;
    }
    params.unflatten(&flat);
    Ok(())
}

/// One loss-trace row, mirrored into the trace CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: u64,
    pub epoch: usize,
    pub author: String,
    pub loss: f64,
    pub margin_term: f64,
    pub threshold_term: f64,
}

/// Renders the trace CSV (`step,epoch,author,loss,margin_term,threshold_term`).
pub fn trace_to_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("step,epoch,author,loss,margin_term,threshold_term\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.step, r.epoch, r.author, r.loss, r.margin_term, r.threshold_term
        );
    }
    out
}

/// Everything needed to restart or evaluate a run.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ParameterStore,
    pub optimizer: Option<OptimizerState>,
    pub config_text: String,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
}

const CKPT_MAGIC: &[u8; 4] = b"SVCK";
const CKPT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CKPT_MAGIC);
        buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        let cfg = self.config_text.as_bytes();
        buf.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        buf.extend_from_slice(cfg);
        buf.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        buf.extend_from_slice(&self.step.to_le_bytes());
        let params = self.params.to_bytes();
        buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
        buf.extend_from_slice(&params);
        match &self.optimizer {
            None => buf.push(0),
            Some(o) => {
                buf.push(1);
                for v in [o.lr, o.beta1, o.beta2, o.eps] {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                buf.extend_from_slice(&o.step.to_le_bytes());
                buf.extend_from_slice(&(o.m.len() as u64).to_le_bytes());
                for v in &o.m {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                for v in &o.v {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(4)? != CKPT_MAGIC {
            return Err(Error::Checkpoint("bad checkpoint magic".into()));
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let cfg_len = r.u64()? as usize;
        let config_text = String::from_utf8(r.take(cfg_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("config text is not UTF-8".into()))?;
        let epoch = r.u64()? as usize;
        let step = r.u64()?;
        let params_len = r.u64()? as usize;
        let params = ParameterStore::from_bytes(r.take(params_len)?)?;
        let optimizer = if r.u8()? == 1 {
            let lr = r.f64()?;
            let beta1 = r.f64()?;
            let beta2 = r.f64()?;
            let eps = r.f64()?;
            let ostep = r.u64()?;
            let n = r.u64()? as usize;
            let mut m = Vec::with_capacity(n);
            for _ in 0..n {
                m.push(r.f64()?);
            }
            let mut v = Vec::with_capacity(n);
            for _ in 0..n {
                v.push(r.f64()?);
            }
            Some(OptimizerState {
                m,
                v,
                step: ostep,
                lr,
                beta1,
                beta2,
                eps,
            })
        } else {
            None
        };
        Ok(Checkpoint {
            params,
            optimizer,
            config_text,
            epoch,
            step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| {
                if e.kind() == std::io::ErrorKind::NotFound {
                    Error::MissingFile(path.to_path_buf())
                } else {
                    Error::Io(e)
                }
            })?
            .read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub trace: Vec<TraceRow>,
}

/// Per-author prepared pools, index-aligned with `dataset.users`.
struct PreparedDataset {
    genuine: Vec<Vec<PreparedSignature>>,
    skilled: Vec<Vec<PreparedSignature>>,
}

fn prepare_train_pool(dataset: &Dataset, cfg: &RunConfig, workers: usize) -> Result<PreparedDataset> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let train: std::collections::HashSet<usize> = dataset.train_users().into_iter().collect();
    let prep_all = |sigs: &[crate::datagen::LoadedSig]| -> Result<Vec<PreparedSignature>> {
        pool.install(|| {
            sigs.par_iter()
                .map(|s| prepare_signature(&s.raw, &cfg.net))
                .collect()
        })
    };
    let mut genuine = Vec::with_capacity(dataset.users.len());
    let mut skilled = Vec::with_capacity(dataset.users.len());
    for (u, user) in dataset.users.iter().enumerate() {
        if train.contains(&u) {
            genuine.push(prep_all(&user.genuine)?);
            skilled.push(prep_all(&user.skilled)?);
        } else {
            genuine.push(Vec::new());
            skilled.push(Vec::new());
        }
    }
    Ok(PreparedDataset { genuine, skilled })
}

fn batch_signatures<'a>(
    prepared: &'a PreparedDataset,
    batch: &TripletBatch,
) -> Vec<&'a PreparedSignature> {
    let mut refs = Vec::new();
    for &(u, i) in &batch.anchors {
        refs.push(&prepared.genuine[u][i]);
    }
    for &(u, i) in &batch.positives {
        refs.push(&prepared.genuine[u][i]);
    }
    for &(u, i) in &batch.skilled {
        refs.push(&prepared.skilled[u][i]);
    }
    for &(u, i) in &batch.random {
        refs.push(&prepared.genuine[u][i]);
    }
    refs
}

/// Runs (or resumes) training. Checkpoints and the loss trace are written
/// under `out_dir` when given; the final state is also returned.
pub fn train(
    dataset: &Dataset,
    cfg: &RunConfig,
    workers: usize,
    out_dir: Option<&Path>,
    resume: Option<Checkpoint>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let train_users = dataset.train_users();
    if train_users.is_empty() {
        return Err(Error::InsufficientData("dataset has no training users".into()));
    }
    let workers = workers.max(1);
    let prepared = prepare_train_pool(dataset, cfg, workers)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;

    let (mut params, mut opt, start_epoch, mut step) = match resume {
        Some(ck) => {
            let opt = ck
                .optimizer
                .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
            (ck.params, opt, ck.epoch, ck.step)
        }
        None => {
            let params = init_parameters(&cfg.net, cfg.seed);
            let flat = params.flat_len();
            (params, OptimizerState::new(flat, cfg.lr), 0, 0)
        }
    };

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }

    let mut trace: Vec<TraceRow> = Vec::new();
    for epoch in start_epoch..cfg.epochs {
        let mut order = train_users.clone();
        let mut order_rng = rng::stream(rng::derive_seed(cfg.seed, "epoch-order", &[epoch as u64]));
        rng::shuffle(&mut order_rng, &mut order);
        for author in order {
            let batch_seed = rng::derive_seed(cfg.seed, "batch", &[epoch as u64, step]);
            let batch = sample_triplets(dataset, author, cfg.counts, batch_seed)?;
            let sigs = batch_signatures(&prepared, &batch);

            // phase 1: per-signature forward passes, each on its own tape
            let forwards: Vec<Embedded> = pool.install(|| {
                sigs.par_iter()
                    .map(|s| embed(s, &cfg.net, &params))
                    .collect()
            });

            // phase 2: loss over embedding leaves on a separate tape
            let mut loss_tape = Tape::new();
            let leaves: Vec<Var> = forwards
                .iter()
                .map(|e| loss_tape.constant(e.values().clone()))
                .collect();
            let (na, ng, nf, _) = batch.roles();
            let embedded = EmbeddedBatch {
                anchors: leaves[..na].to_vec(),
                positives: leaves[na..na + ng].to_vec(),
                skilled: leaves[na + ng..na + ng + nf].to_vec(),
                random: leaves[na + ng + nf..].to_vec(),
            };
            let terms = author_loss(&mut loss_tape, &embedded, &cfg.loss, cfg.dtw)?;
            let loss = loss_tape.scalar(terms.total);
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss {loss} at seed {} epoch {epoch} step {step}",
                    cfg.seed
                )));
            }
            loss_tape.backward(terms.total);

            // phase 3: chain each embedding gradient through its own tape
            let seeds: Vec<ndarray::Array2<f64>> = leaves
                .iter()
                .map(|v| loss_tape.grad(*v).clone())
                .collect();
            let grad_vecs: Vec<Vec<f64>> = pool.install(|| {
                forwards
                    .into_par_iter()
                    .zip(seeds.into_par_iter())
                    .map(|(mut e, seed)| {
                        let out = e.output();
                        e.tape.backward_seeded(&[(out, seed)]);
                        params.grads_from_tape(&e.tape, &e.bound)
                    })
                    .collect()
            });
            let mut grads = vec![0.0; params.flat_len()];
            for gv in &grad_vecs {
                for (a, b) in grads.iter_mut().zip(gv) {
                    *a += *b;
                }
            }

            if let Some(clip) = cfg.clip_norm {
                clip_global_norm(&mut grads, clip);
            }
            optimizer_step(&mut params, &grads, &mut opt).map_err(|e| {
                Error::NonFinite(format!("seed {} epoch {epoch} step {step}: {e}", cfg.seed))
            })?;

            trace.push(TraceRow {
                step,
                epoch,
                author: dataset.users[author].user_id.clone(),
                loss,
                margin_term: loss_tape.scalar(terms.margin),
                threshold_term: loss_tape.scalar(terms.threshold),
            });
            step += 1;

            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every as u64 == 0 {
                if let Some(dir) = out_dir {
                    let ck = Checkpoint {
                        params: params.clone(),
                        optimizer: Some(opt.clone()),
                        config_text: cfg.to_text(),
                        epoch,
                        step,
                    };
                    ck.save(&dir.join(format!("checkpoint_step{step:06}.bin")))?;
                }
            }
        }
        if let Some(dir) = out_dir {
            // epoch-boundary checkpoint enables exact resume
            let ck = Checkpoint {
                params: params.clone(),
                optimizer: Some(opt.clone()),
                config_text: cfg.to_text(),
                epoch: epoch + 1,
                step,
            };
            ck.save(&dir.join("checkpoint_latest.bin"))?;
        }
    }

    let checkpoint = Checkpoint {
        params,
        optimizer: Some(opt),
        config_text: cfg.to_text(),
        epoch: cfg.epochs,
        step,
    };
    if let Some(dir) = out_dir {
        checkpoint.save(&dir.join("checkpoint_final.bin"))?;
        std::fs::write(dir.join("loss_trace.csv"), trace_to_csv(&trace))?;
    }
    Ok(TrainOutput { checkpoint, trace })
}
