//! The embedding network: structure-constrained graph attention over two
//! adjacency graphs, a recurrent temporal branch, gated residual fusion,
//! stacked blocks, and a pooled recurrent tail.
//!
//! Per block, the spatial branch runs one attention layer on the step graph
//! and one on the nearest-neighbor graph, concatenates the two outputs, and
//! projects back through a feed-forward layer with layer normalization. Edge
//! weights produced by each attention layer persist into the next block; the
//! softmax support mask never widens. The temporal branch is a recurrent
//! pass over the block input; a sigmoid gate interpolates the two branches
//! elementwise before the residual connection.

use std::sync::Arc;
use std::str::FromStr;

use ndarray::Array2;

use crate::autodiff::{BoundParams, ParameterStore, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{build_knn_with, build_kstep, Adjacency};
use crate::rng;
use crate::signal::RhoVariant;

/// Temporal subsampling applied after the block stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Pooling {
    #[default]
    Max,
    Avg,
    None,
}

/// Which branches run: the full network, the recurrent branch only, or the
/// dual-graph attention branch only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Variant {
    #[default]
    Full,
    GruOnly,
    DgatrOnly,
}

/// Node feature layout fed to the input projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FeatureSet {
    /// x, y, p, dt plus the twelve centralized writing functions.
    #[default]
    Full16,
    /// The twelve centralized writing functions alone.
    TimeFunctions12,
}

#[derive(Debug, Clone)]
pub struct NetworkConfig {
    /// Hidden width d.
    pub hidden_dim: usize,
    pub n_blocks: usize,
    pub k_step: usize,
    pub k_nn: usize,
    pub pooling: Pooling,
    /// Recurrent layer after pooling.
    pub gru_post: bool,
    pub variant: Variant,
    pub feature_set: FeatureSet,
    pub rho_variant: RhoVariant,
    pub knn_symmetrize: bool,
    /// Reset edge weights to the binary structure at each block instead of
    /// carrying them forward.
    pub reset_edge_weights: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            hidden_dim: 64,
            n_blocks: 2,
            k_step: 2,
            k_nn: 20,
            pooling: Pooling::Max,
            gru_post: true,
            variant: Variant::Full,
            feature_set: FeatureSet::Full16,
            rho_variant: RhoVariant::TangentAngle,
            knn_symmetrize: false,
            reset_edge_weights: false,
        }
    }
}

impl NetworkConfig {
    pub fn feature_dim(&self) -> usize {
        match self.feature_set {
            FeatureSet::Full16 => 16,
            FeatureSet::TimeFunctions12 => 12,
        }
    }

    /// Embedding length for an input of `l` points.
    pub fn output_len(&self, l: usize) -> usize {
        match self.pooling {
            Pooling::Max | Pooling::Avg => l.div_ceil(2),
            Pooling::None => l,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim < 1 {
            return Err(Error::Config("hidden_dim must be >= 1".into()));
        }
        if self.n_blocks < 1 {
            return Err(Error::Config("n_blocks must be >= 1".into()));
        }
        if self.k_step < 1 || self.k_nn < 1 {
            return Err(Error::Config("graph k values must be >= 1".into()));
        }
        Ok(())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "gru_only" => Ok(Variant::GruOnly),
            "dgatr_only" => Ok(Variant::DgatrOnly),
            other => Err(Error::Config(format!(
                "unknown variant `{other}` (expected full, gru_only, dgatr_only)"
            ))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::GruOnly => "gru_only",
            Variant::DgatrOnly => "dgatr_only",
        })
    }
}

impl FromStr for Pooling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Pooling::Max),
            "avg" => Ok(Pooling::Avg),
            "none" => Ok(Pooling::None),
            other => Err(Error::Config(format!(
                "unknown pooling `{other}` (expected max, avg, none)"
            ))),
        }
    }
}

impl std::fmt::Display for Pooling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Pooling::Max => "max",
            Pooling::Avg => "avg",
            Pooling::None => "none",
        })
    }
}

// ---- parameter handles ----

/// Query/key/value projections of one attention layer.
#[derive(Clone, Copy)]
pub struct GalParams {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

#[derive(Clone, Copy)]
pub struct GruParams {
    pub wz: Var,
    pub uz: Var,
    pub bz: Var,
    pub wr: Var,
    pub ur: Var,
    pub br: Var,
    pub wh: Var,
    pub uh: Var,
    pub bh: Var,
}

/// Every learnable piece of one block.
#[derive(Clone, Copy)]
pub struct BlockParams {
    pub step: GalParams,
    pub knn: GalParams,
    pub wc: Var,
    pub bc: Var,
    pub ln_gain: Var,
    pub ln_bias: Var,
    pub gru: GruParams,
    pub wg: Var,
    pub bg: Var,
}

fn gal_names(prefix: &str) -> [String; 3] {
    [
        format!("{prefix}.wq"),
        format!("{prefix}.wk"),
        format!("{prefix}.wv"),
    ]
}

fn gru_names(prefix: &str) -> [String; 9] {
    [
        format!("{prefix}.wz"),
        format!("{prefix}.uz"),
        format!("{prefix}.bz"),
        format!("{prefix}.wr"),
        format!("{prefix}.ur"),
        format!("{prefix}.br"),
        format!("{prefix}.wh"),
        format!("{prefix}.uh"),
        format!("{prefix}.bh"),
    ]
}

impl GalParams {
    pub fn bind(bound: &BoundParams, prefix: &str) -> Self {
        let [q, k, v] = gal_names(prefix);
        GalParams {
            wq: bound.var(&q),
            wk: bound.var(&k),
            wv: bound.var(&v),
        }
    }
}

impl GruParams {
    pub fn bind(bound: &BoundParams, prefix: &str) -> Self {
        let [wz, uz, bz, wr, ur, br, wh, uh, bh] = gru_names(prefix);
        GruParams {
            wz: bound.var(&wz),
            uz: bound.var(&uz),
            bz: bound.var(&bz),
            wr: bound.var(&wr),
            ur: bound.var(&ur),
            br: bound.var(&br),
            wh: bound.var(&wh),
            uh: bound.var(&uh),
            bh: bound.var(&bh),
        }
    }
}

impl BlockParams {
    pub fn bind(bound: &BoundParams, block: usize) -> Self {
        let p = format!("block{block}");
        BlockParams {
            step: GalParams::bind(bound, &format!("{p}.step")),
            knn: GalParams::bind(bound, &format!("{p}.knn")),
            wc: bound.var(&format!("{p}.fuse.wc")),
            bc: bound.var(&format!("{p}.fuse.bc")),
            ln_gain: bound.var(&format!("{p}.fuse.ln_gain")),
            ln_bias: bound.var(&format!("{p}.fuse.ln_bias")),
            gru: GruParams::bind(bound, &format!("{p}.gru")),
            wg: bound.var(&format!("{p}.gate.wg")),
            bg: bound.var(&format!("{p}.gate.bg")),
        }
    }
}

// ---- initialization ----

/// Creates every parameter of the configured network, seeded.
///
/// Matrices are uniform(-a, a) with `a = sqrt(6 / (fan_in + fan_out))`;
/// biases start at zero, layer-norm gains at one. The same seed and config
/// always produce bit-identical parameters, independent of the variant.
pub fn init_parameters(config: &NetworkConfig, seed: u64) -> ParameterStore {
    let d = config.hidden_dim;
    let mut r = rng::stream(rng::derive_seed(seed, "init", &[]));
    let mut store = ParameterStore::new();

    let mut matrix = |r: &mut rand_chacha::ChaCha8Rng, rows: usize, cols: usize| {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        Array2::from_shape_fn((rows, cols), |_| rng::uniform(r, -a, a))
    };

    store.insert("input.w", matrix(&mut r, config.feature_dim(), d), true);
    store.insert("input.b", Array2::zeros((1, d)), true);
    for b in 0..config.n_blocks {
        let p = format!("block{b}");
        for branch in ["step", "knn"] {
            for name in gal_names(&format!("{p}.{branch}")) {
                store.insert(&name, matrix(&mut r, d, d), true);
            }
        }
        store.insert(&format!("{p}.fuse.wc"), matrix(&mut r, 2 * d, d), true);
        store.insert(&format!("{p}.fuse.bc"), Array2::zeros((1, d)), true);
        store.insert(&format!("{p}.fuse.ln_gain"), Array2::ones((1, d)), true);
        store.insert(&format!("{p}.fuse.ln_bias"), Array2::zeros((1, d)), true);
        let g = format!("{p}.gru");
        for name in gru_names(&g) {
            if name.contains(".b") {
                store.insert(&name, Array2::zeros((1, d)), true);
            } else {
                store.insert(&name, matrix(&mut r, d, d), true);
            }
        }
        store.insert(&format!("{p}.gate.wg"), matrix(&mut r, 2 * d, d), true);
        store.insert(&format!("{p}.gate.bg"), Array2::zeros((1, d)), true);
    }
    if config.gru_post {
        for name in gru_names("tail.gru") {
            if name.contains(".b") {
                store.insert(&name, Array2::zeros((1, d)), true);
            } else {
                store.insert(&name, matrix(&mut r, d, d), true);
            }
        }
    }
    store
}

// ---- forward passes ----

/// One attention layer under a fixed neighborhood structure.
///
/// Raw scores are scaled dot products of the projected queries and keys,
/// multiplied by the incoming edge weights, then renormalized by a softmax
/// restricted to each node's neighbors. Returns the attended node features
/// and the new edge weights (which feed the next layer).
pub fn gal_forward(
    tape: &mut Tape,
    nodes: Var,
    weights: Var,
    neighbors: &Arc<Vec<Vec<usize>>>,
    params: &GalParams,
) -> (Var, Var) {
    let d = tape.value(nodes).ncols();
    let wq_t = tape.transpose(params.wq);
    let wk_t = tape.transpose(params.wk);
    let wv_t = tape.transpose(params.wv);
    let q = tape.matmul(nodes, wq_t);
    let k = tape.matmul(nodes, wk_t);
    let k_t = tape.transpose(k);
    let scores = tape.matmul(q, k_t);
    let scaled = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let gated = tape.mul(scaled, weights);
    let new_weights = tape.masked_softmax(gated, Arc::clone(neighbors));
    let v = tape.matmul(nodes, wv_t);
    let out = tape.matmul(new_weights, v);
    (out, new_weights)
}

/// Dual-graph attention block: one attention layer per graph, feature
/// concatenation (nearest-neighbor branch first), feed-forward projection,
/// relu, layer normalization.
pub fn dgatr_forward(
    tape: &mut Tape,
    nodes: Var,
    step_weights: Var,
    step_neighbors: &Arc<Vec<Vec<usize>>>,
    knn_weights: Var,
    knn_neighbors: &Arc<Vec<Vec<usize>>>,
    params: &BlockParams,
) -> (Var, Var, Var) {
    let (step_out, step_w) = gal_forward(tape, nodes, step_weights, step_neighbors, &params.step);
    let (knn_out, knn_w) = gal_forward(tape, nodes, knn_weights, knn_neighbors, &params.knn);
    let cat = tape.concat_cols(knn_out, step_out);
    let proj = tape.matmul(cat, params.wc);
    let shifted = tape.add(proj, params.bc);
    let act = tape.relu(shifted);
    let out = tape.layer_norm(act, params.ln_gain, params.ln_bias);
    (out, step_w, knn_w)
}

/// Standard recurrent pass returning all hidden states.
///
/// Update and reset gates are sigmoid, the candidate is tanh over the
/// reset-gated previous state, and
/// `h_t = (1 - z) * h_{t-1} + z * candidate`.
pub fn gru_forward(tape: &mut Tape, seq: Var, params: &GruParams, h0: Option<Var>) -> Var {
    let (l, d) = tape.value(seq).dim();
    let mut h = h0.unwrap_or_else(|| tape.constant(Array2::zeros((1, d))));
    let mut states = Vec::with_capacity(l);
    for t in 0..l {
        let x = tape.row(seq, t);
        let xz = tape.matmul(x, params.wz);
        let hz = tape.matmul(h, params.uz);
        let zsum = tape.add(xz, hz);
        let zpre = tape.add(zsum, params.bz);
        let z = tape.sigmoid(zpre);

        let xr = tape.matmul(x, params.wr);
        let hr = tape.matmul(h, params.ur);
        let rsum = tape.add(xr, hr);
        let rpre = tape.add(rsum, params.br);
        let r = tape.sigmoid(rpre);

        let rh = tape.mul(r, h);
        let xh = tape.matmul(x, params.wh);
        let hh = tape.matmul(rh, params.uh);
        let csum = tape.add(xh, hh);
        let cpre = tape.add(csum, params.bh);
        let cand = tape.tanh(cpre);

        let keep_gate = tape.one_minus(z);
        let keep = tape.mul(keep_gate, h);
        let take = tape.mul(z, cand);
        h = tape.add(keep, take);
        states.push(h);
    }
    tape.stack_rows(&states)
}

/// Sigmoid-gated elementwise interpolation of the two branches plus the
/// residual from the block input.
pub fn gated_fuse(
    tape: &mut Tape,
    spatial: Var,
    temporal: Var,
    previous: Var,
    wg: Var,
    bg: Var,
) -> Var {
    assert_eq!(
        tape.value(spatial).dim(),
        tape.value(temporal).dim(),
        "gated_fuse branch shapes differ"
    );
    let cat = tape.concat_cols(spatial, temporal);
    let proj = tape.matmul(cat, wg);
    let pre = tape.add(proj, bg);
    let z = tape.sigmoid(pre);
    let a = tape.mul(z, spatial);
    let zc = tape.one_minus(z);
    let b = tape.mul(zc, temporal);
    let mix = tape.add(a, b);
    tape.add(mix, previous)
}

/// Full forward trace: the embedding plus each block's edge-weight nodes
/// (step graph, nearest-neighbor graph), for mask-persistence checks.
pub struct NetworkTrace {
    pub output: Var,
    pub block_weights: Vec<(Var, Var)>,
}

/// Runs the configured network over prepared inputs on the given tape.
pub fn network_forward_prepared(
    tape: &mut Tape,
    input: &Array2<f64>,
    step: &Adjacency,
    knn: &Adjacency,
    config: &NetworkConfig,
    bound: &BoundParams,
) -> NetworkTrace {
    assert_eq!(
        input.ncols(),
        config.feature_dim(),
        "input width does not match the configured feature set"
    );
    let x = tape.constant(input.clone());
    let w_in = bound.var("input.w");
    let b_in = bound.var("input.b");
    let proj = tape.matmul(x, w_in);
    let mut v = tape.add(proj, b_in);

    let step_nb = Arc::new(step.neighbors.clone());
    let knn_nb = Arc::new(knn.neighbors.clone());
    let mut step_w = tape.constant(step.weights.clone());
    let mut knn_w = tape.constant(knn.weights.clone());
    let mut block_weights = Vec::with_capacity(config.n_blocks);

    for b in 0..config.n_blocks {
        if config.reset_edge_weights && b > 0 {
            step_w = tape.constant(step.weights.clone());
            knn_w = tape.constant(knn.weights.clone());
        }
        let params = BlockParams::bind(bound, b);
        let prev = v;
        v = match config.variant {
            Variant::Full => {
                let (spatial, sw, kw) =
                    dgatr_forward(tape, prev, step_w, &step_nb, knn_w, &knn_nb, &params);
                step_w = sw;
                knn_w = kw;
                let temporal = gru_forward(tape, prev, &params.gru, None);
                gated_fuse(tape, spatial, temporal, prev, params.wg, params.bg)
            }
            Variant::GruOnly => {
                let temporal = gru_forward(tape, prev, &params.gru, None);
                tape.add(temporal, prev)
            }
            Variant::DgatrOnly => {
                let (spatial, sw, kw) =
                    dgatr_forward(tape, prev, step_w, &step_nb, knn_w, &knn_nb, &params);
                step_w = sw;
                knn_w = kw;
                tape.add(spatial, prev)
            }
        };
        block_weights.push((step_w, knn_w));
    }

    let pooled = match config.pooling {
        Pooling::Max => tape.max_pool_stride2(v),
        Pooling::Avg => tape.avg_pool_stride2(v),
        Pooling::None => v,
    };
    let output = if config.gru_post {
        let tail = GruParams::bind(bound, "tail.gru");
        gru_forward(tape, pooled, &tail, None)
    } else {
        pooled
    };
    NetworkTrace {
        output,
        block_weights,
    }
}

/// Builds both graphs from the stroke flags and coordinates, binds the
/// parameters onto the tape, and runs the network. Returns the embedding
/// node.
pub fn network_forward(
    tape: &mut Tape,
    input: &Array2<f64>,
    flags: &[u8],
    coords: &Array2<f64>,
    config: &NetworkConfig,
    params: &ParameterStore,
) -> Result<Var> {
    config.validate()?;
    let step = build_kstep(flags, config.k_step)?;
    let knn = build_knn_with(coords, config.k_nn, config.knn_symmetrize);
    let bound = params.bind(tape);
    Ok(network_forward_prepared(tape, input, &step, &knn, config, &bound).output)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_kstep;
    use crate::rng;
    use ndarray::arr2;

    fn tiny_config(d: usize, blocks: usize) -> NetworkConfig {
        NetworkConfig {
            hidden_dim: d,
            n_blocks: blocks,
            k_step: 2,
            k_nn: 2,
            ..Default::default()
        }
    }

    #[test]
    fn uniform_attention_averages_neighborhoods() {
        // zero Q/K projections and unit incoming weights make every score
        // equal, so the softmax is uniform over each neighborhood and the
        // output with identity values is the neighborhood mean.
        let mut tape = Tape::new();
        let adj = build_kstep(&[1, 0, 2], 1).unwrap();
        let nodes_val = arr2(&[[1.0, 0.0], [0.0, 2.0], [3.0, 1.0]]);
        let nodes = tape.constant(nodes_val.clone());
        let weights = tape.constant(adj.weights.clone());
        let zero = tape.constant(Array2::zeros((2, 2)));
        let eye = tape.constant(Array2::eye(2));
        let params = GalParams {
            wq: zero,
            wk: zero,
            wv: eye,
        };
        let nb = Arc::new(adj.neighbors.clone());
        let (out, w) = gal_forward(&mut tape, nodes, weights, &nb, &params);
        let o = tape.value(out);
        // neighborhoods: {0,1}, {0,1,2}, {1,2}
        assert!((o[[0, 0]] - 0.5).abs() < 1e-12);
        assert!((o[[0, 1]] - 1.0).abs() < 1e-12);
        assert!((o[[1, 0]] - (4.0 / 3.0)).abs() < 1e-12);
        assert!((o[[1, 1]] - 1.0).abs() < 1e-12);
        assert!((o[[2, 0]] - 1.5).abs() < 1e-12);
        assert!((o[[2, 1]] - 1.5).abs() < 1e-12);
        let wv = tape.value(w);
        for (i, nbrs) in adj.neighbors.iter().enumerate() {
            for &j in nbrs {
                assert!((wv[[i, j]] - 1.0 / nbrs.len() as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_node_with_self_loop_is_identity() {
        let mut tape = Tape::new();
        let adj = build_kstep(&[1, 2], 1).unwrap(); // use first node only below
        let _ = adj;
        let nodes = tape.constant(arr2(&[[0.7, -1.2]]));
        let weights = tape.constant(Array2::ones((1, 1)));
        let q = tape.constant(arr2(&[[0.3, 0.1], [2.0, -1.0]]));
        let eye = tape.constant(Array2::eye(2));
        let params = GalParams { wq: q, wk: q, wv: eye };
        let nb = Arc::new(vec![vec![0usize]]);
        let (out, w) = gal_forward(&mut tape, nodes, weights, &nb, &params);
        assert_eq!(tape.value(out), &arr2(&[[0.7, -1.2]]));
        assert_eq!(tape.value(w)[[0, 0]], 1.0);
    }

    #[test]
    fn two_node_scalar_case_matches_direct_formula() {
        // d = 1, all projections [1], values [1, 2], fully connected.
        let mut tape = Tape::new();
        let nodes = tape.constant(arr2(&[[1.0], [2.0]]));
        let weights = tape.constant(Array2::ones((2, 2)));
        let one = tape.constant(arr2(&[[1.0]]));
        let params = GalParams { wq: one, wk: one, wv: one };
        let nb = Arc::new(vec![vec![0, 1], vec![0, 1]]);
        let (out, w) = gal_forward(&mut tape, nodes, weights, &nb, &params);

        // independent evaluation of the three equations
        let v = [1.0f64, 2.0f64];
        for i in 0..2 {
            let scores = [v[i] * v[0], v[i] * v[1]]; // /sqrt(1) * weight 1
            let m = scores[0].max(scores[1]);
            let e = [(scores[0] - m).exp(), (scores[1] - m).exp()];
            let z = e[0] + e[1];
            let att = [e[0] / z, e[1] / z];
            let expect = att[0] * v[0] + att[1] * v[1];
            assert!((tape.value(out)[[i, 0]] - expect).abs() < 1e-12);
            assert!((tape.value(w)[[i, 0]] - att[0]).abs() < 1e-12);
            assert!((tape.value(w)[[i, 1]] - att[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn dgatr_with_identical_graphs_duplicates_branches() {
        let d = 3;
        let config = tiny_config(d, 1);
        let params = init_parameters(&config, 5);
        // copy the step projections over the knn projections
        let mut params = params;
        for name in ["wq", "wk", "wv"] {
            let step = params.get(&format!("block0.step.{name}")).clone();
            *params.get_mut(&format!("block0.knn.{name}")) = step;
        }
        let adj = build_kstep(&[1, 0, 0, 2], 2).unwrap();
        let nb = Arc::new(adj.neighbors.clone());

        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let block = BlockParams::bind(&bound, 0);
        let nodes = tape.constant(arr2(&[
            [0.1, -0.4, 1.0],
            [0.7, 0.2, -0.3],
            [-1.1, 0.5, 0.9],
            [0.3, 0.3, 0.3],
        ]));
        let w1 = tape.constant(adj.weights.clone());
        let w2 = tape.constant(adj.weights.clone());
        let (step_out, _) = gal_forward(&mut tape, nodes, w1, &nb, &block.step);
        let (knn_out, _) = gal_forward(&mut tape, nodes, w2, &nb, &block.knn);
        assert_eq!(tape.value(step_out), tape.value(knn_out));

        let w1 = tape.constant(adj.weights.clone());
        let w2 = tape.constant(adj.weights.clone());
        let (out, _, _) = dgatr_forward(&mut tape, nodes, w1, &nb, w2, &nb, &block);
        assert_eq!(tape.value(out).dim(), (4, d));
    }

    #[test]
    fn dgatr_single_point_hand_evaluation() {
        let d = 2;
        let config = tiny_config(d, 1);
        let params = init_parameters(&config, 11);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let block = BlockParams::bind(&bound, 0);
        let nodes_val = arr2(&[[0.6, -0.9]]);
        let nodes = tape.constant(nodes_val.clone());
        let w1 = tape.constant(Array2::ones((1, 1)));
        let w2 = tape.constant(Array2::ones((1, 1)));
        let nb = Arc::new(vec![vec![0usize]]);
        let (out, _, _) = dgatr_forward(&mut tape, nodes, w1, &nb, w2, &nb, &block);

        // independent evaluation: attention over one self-loop is W_V v for
        // each branch, then concat (knn first), FFN, relu, layer norm.
        let wv_step = params.get("block0.step.wv");
        let wv_knn = params.get("block0.knn.wv");
        let v_step = nodes_val.dot(&wv_step.t());
        let v_knn = nodes_val.dot(&wv_knn.t());
        let mut cat = Array2::zeros((1, 2 * d));
        for j in 0..d {
            cat[[0, j]] = v_knn[[0, j]];
            cat[[0, d + j]] = v_step[[0, j]];
        }
        let pre = cat.dot(params.get("block0.fuse.wc")) + params.get("block0.fuse.bc");
        let act = pre.mapv(|x| x.max(0.0));
        let mean = act.sum() / d as f64;
        let var = act.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + crate::autodiff::LAYER_NORM_EPS).sqrt();
        for j in 0..d {
            let want = params.get("block0.fuse.ln_gain")[[0, j]] * (act[[0, j]] - mean) * inv
                + params.get("block0.fuse.ln_bias")[[0, j]];
            assert!((tape.value(out)[[0, j]] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn gru_all_zero_parameters_fix_zero() {
        let d = 3;
        let mut tape = Tape::new();
        let zero_m = tape.constant(Array2::zeros((d, d)));
        let zero_b = tape.constant(Array2::zeros((1, d)));
        let params = GruParams {
            wz: zero_m,
            uz: zero_m,
            bz: zero_b,
            wr: zero_m,
            ur: zero_m,
            br: zero_b,
            wh: zero_m,
            uh: zero_m,
            bh: zero_b,
        };
        let seq = tape.constant(arr2(&[[1.0, -2.0, 0.5], [0.3, 0.3, 0.3]]));
        let out = gru_forward(&mut tape, seq, &params, None);
        assert_eq!(tape.value(out), &Array2::<f64>::zeros((2, d)));
    }

    #[test]
    fn gru_single_step_matches_cell_oracle() {
        let d = 4;
        let mut r = rng::stream(23);
        let mut mat = |rows: usize, cols: usize| {
            Array2::from_shape_fn((rows, cols), |_| rng::uniform(&mut r, -0.9, 0.9))
        };
        let (wz, uz, wr, ur, wh, uh) = (mat(d, d), mat(d, d), mat(d, d), mat(d, d), mat(d, d), mat(d, d));
        let (bz, br, bh) = (mat(1, d), mat(1, d), mat(1, d));
        let x = mat(1, d);

        let mut tape = Tape::new();
        let params = GruParams {
            wz: tape.constant(wz.clone()),
            uz: tape.constant(uz.clone()),
            bz: tape.constant(bz.clone()),
            wr: tape.constant(wr.clone()),
            ur: tape.constant(ur.clone()),
            br: tape.constant(br.clone()),
            wh: tape.constant(wh.clone()),
            uh: tape.constant(uh.clone()),
            bh: tape.constant(bh.clone()),
        };
        let seq = tape.constant(x.clone());
        let out = gru_forward(&mut tape, seq, &params, None);

        // independent single-cell evaluation with h0 = 0
        let sig = |m: Array2<f64>| m.mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let z = sig(x.dot(&wz) + &bz);
        let cand = (x.dot(&wh) + &bh).mapv(f64::tanh);
        let want = (1.0 - &z) * 0.0 + &z * &cand;
        for j in 0..d {
            assert!((tape.value(out)[[0, j]] - want[[0, j]]).abs() < 1e-12);
        }
    }

    #[test]
    fn gated_fuse_neutral_and_saturated() {
        let mut tape = Tape::new();
        let s = tape.constant(arr2(&[[1.0, 3.0], [2.0, -1.0]]));
        let t_ = tape.constant(arr2(&[[0.0, 1.0], [4.0, 1.0]]));
        let prev = tape.constant(arr2(&[[10.0, 10.0], [10.0, 10.0]]));
        let wg0 = tape.constant(Array2::zeros((4, 2)));
        let bg0 = tape.constant(Array2::zeros((1, 2)));
        let out = gated_fuse(&mut tape, s, t_, prev, wg0, bg0);
        assert_eq!(tape.value(out), &arr2(&[[10.5, 12.0], [13.0, 10.0]]));

        let bg_sat = tape.constant(Array2::from_elem((1, 2), 50.0));
        let out = gated_fuse(&mut tape, s, t_, prev, wg0, bg_sat);
        let want = arr2(&[[11.0, 13.0], [12.0, 9.0]]);
        for (a, b) in tape.value(out).iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gated_fuse_matches_direct_formula() {
        let mut r = rng::stream(3);
        let sv = Array2::from_shape_fn((3, 4), |_| rng::uniform(&mut r, -2.0, 2.0));
        let tv = Array2::from_shape_fn((3, 4), |_| rng::uniform(&mut r, -2.0, 2.0));
        let pv = Array2::from_shape_fn((3, 4), |_| rng::uniform(&mut r, -2.0, 2.0));
        let wgv = Array2::from_shape_fn((8, 4), |_| rng::uniform(&mut r, -1.0, 1.0));
        let bgv = Array2::from_shape_fn((1, 4), |_| rng::uniform(&mut r, -1.0, 1.0));

        let mut tape = Tape::new();
        let s = tape.constant(sv.clone());
        let t_ = tape.constant(tv.clone());
        let p = tape.constant(pv.clone());
        let wg = tape.constant(wgv.clone());
        let bg = tape.constant(bgv.clone());
        let out = gated_fuse(&mut tape, s, t_, p, wg, bg);

        let mut cat = Array2::zeros((3, 8));
        for i in 0..3 {
            for j in 0..4 {
                cat[[i, j]] = sv[[i, j]];
                cat[[i, 4 + j]] = tv[[i, j]];
            }
        }
        let z = (cat.dot(&wgv) + &bgv).mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let want = &z * &sv + &(1.0 - &z) * &tv + &pv;
        for (a, b) in tape.value(out).iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn line_inputs(l: usize, d_f: usize) -> (Array2<f64>, Vec<u8>, Array2<f64>) {
        let mut r = rng::stream(1234);
        let input = Array2::from_shape_fn((l, d_f), |_| rng::uniform(&mut r, -1.0, 1.0));
        let flags: Vec<u8> = (0..l)
            .map(|i| {
                if i == 0 {
                    1
                } else if i == l - 1 {
                    2
                } else {
                    0
                }
            })
            .collect();
        let coords = Array2::from_shape_fn((l, 2), |_| rng::uniform(&mut r, -1.0, 1.0));
        (input, flags, coords)
    }

    #[test]
    fn pooled_network_halves_the_length() {
        let config = tiny_config(4, 2);
        let params = init_parameters(&config, 7);
        let (input, flags, coords) = line_inputs(9, 16);
        let mut tape = Tape::new();
        let h = network_forward(&mut tape, &input, &flags, &coords, &config, &params).unwrap();
        assert_eq!(tape.value(h).dim(), (5, 4));
    }

    #[test]
    fn forward_is_deterministic_across_fresh_tapes() {
        let config = tiny_config(4, 2);
        let params = init_parameters(&config, 9);
        let params2 = init_parameters(&config, 9);
        let (input, flags, coords) = line_inputs(7, 16);
        let mut t1 = Tape::new();
        let h1 = network_forward(&mut t1, &input, &flags, &coords, &config, &params).unwrap();
        let mut t2 = Tape::new();
        let h2 = network_forward(&mut t2, &input, &flags, &coords, &config, &params2).unwrap();
        let a: Vec<u64> = t1.value(h1).iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = t2.value(h2).iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn block_outputs_stay_finite_on_bounded_random_inputs() {
        let config = NetworkConfig {
            pooling: Pooling::None,
            gru_post: false,
            ..tiny_config(4, 2)
        };
        let params = init_parameters(&config, 3);
        for trial in 0..1000u64 {
            let mut r = rng::stream(trial);
            let l = 2 + rng::index(&mut r, 5);
            let input = Array2::from_shape_fn((l, 16), |_| rng::uniform(&mut r, -10.0, 10.0));
            let flags: Vec<u8> = (0..l)
                .map(|i| {
                    if i == 0 {
                        1
                    } else if i == l - 1 {
                        2
                    } else {
                        0
                    }
                })
                .collect();
            let coords = Array2::from_shape_fn((l, 2), |_| rng::uniform(&mut r, -10.0, 10.0));
            let mut tape = Tape::new();
            let h = network_forward(&mut tape, &input, &flags, &coords, &config, &params).unwrap();
            assert!(
                tape.value(h).iter().all(|v| v.is_finite()),
                "trial {trial} produced non-finite output"
            );
        }
    }

    #[test]
    fn edge_weights_outside_structure_stay_zero_in_every_block() {
        let config = tiny_config(3, 3);
        let params = init_parameters(&config, 21);
        let (input, flags, coords) = line_inputs(8, 16);
        let step = build_kstep(&flags, config.k_step).unwrap();
        let knn = crate::graph::build_knn(&coords, config.k_nn);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let trace = network_forward_prepared(&mut tape, &input, &step, &knn, &config, &bound);
        assert_eq!(trace.block_weights.len(), 3);
        for (sw, kw) in &trace.block_weights {
            let s = tape.value(*sw);
            let k = tape.value(*kw);
            for i in 0..8 {
                for j in 0..8 {
                    if step.structure[[i, j]] == 0.0 {
                        assert_eq!(s[[i, j]], 0.0);
                    }
                    if knn.structure[[i, j]] == 0.0 {
                        assert_eq!(k[[i, j]], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn gru_only_variant_ignores_coordinates() {
        let config = NetworkConfig {
            variant: Variant::GruOnly,
            ..tiny_config(4, 2)
        };
        let params = init_parameters(&config, 13);
        let (input, flags, coords) = line_inputs(7, 16);
        let mut permuted = coords.clone();
        // reverse the rows
        for i in 0..7 {
            for c in 0..2 {
                permuted[[i, c]] = coords[[6 - i, c]];
            }
        }
        let mut t1 = Tape::new();
        let h1 = network_forward(&mut t1, &input, &flags, &coords, &config, &params).unwrap();
        let mut t2 = Tape::new();
        let h2 = network_forward(&mut t2, &input, &flags, &permuted, &config, &params).unwrap();
        let a: Vec<u64> = t1.value(h1).iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = t2.value(h2).iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }
}
