//! Glue between raw captures and the network: feature preparation with
//! cached graphs, plus embedding helpers.
//!
//! Besides the centralization done in the signal stage, the twelve writing
//! functions are scaled to unit variance per signature before entering the
//! input projection. Their raw magnitudes span several orders (velocity
//! derivatives reach the hundreds at millisecond sampling) and would saturate
//! the recurrent gates at initialization. The four raw channels (x, y, p,
//! dt) are already range-bounded and stay untouched.

use ndarray::Array2;

use crate::autodiff::{BoundParams, ParameterStore, Tape, Var};
use crate::error::Result;
use crate::graph::{build_knn_with, build_kstep, Adjacency};
use crate::model::{network_forward_prepared, FeatureSet, NetworkConfig, NetworkTrace};
use crate::signal::{
    assemble_input, centralize, extract_time_functions_with, normalize_signature, RawSignature,
};

/// A capture converted to node features with both graphs prebuilt, ready for
/// any number of forward passes.
#[derive(Debug, Clone)]
pub struct PreparedSignature {
    /// L x d_f node features.
    pub features: Array2<f64>,
    pub flags: Vec<u8>,
    /// Normalized coordinates, L x 2.
    pub coords: Array2<f64>,
    pub step: Adjacency,
    pub knn: Adjacency,
}

impl PreparedSignature {
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }
}

/// Scales each column to unit variance (the columns are already centered).
fn scale_to_unit_variance(m: &mut Array2<f64>, cols: std::ops::Range<usize>) {
    let n = m.nrows() as f64;
    for c in cols {
        let mut col = m.column_mut(c);
        let std = (col.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
        col.mapv_inplace(|v| v / (std + crate::signal::EPS));
    }
}

/// Validates, normalizes, extracts and centralizes features, assembles the
/// configured channel set, conditions the function channels, and builds both
/// adjacency graphs.
pub fn prepare_signature(raw: &RawSignature, config: &NetworkConfig) -> Result<PreparedSignature> {
    let sig = normalize_signature(raw)?;
    let funcs = centralize(&extract_time_functions_with(&sig, config.rho_variant)?);
    let mut features = match config.feature_set {
        FeatureSet::Full16 => assemble_input(&sig, &funcs)?.values,
        FeatureSet::TimeFunctions12 => funcs.values,
    };
    let func_cols = match config.feature_set {
        FeatureSet::Full16 => 4..16,
        FeatureSet::TimeFunctions12 => 0..12,
    };
    scale_to_unit_variance(&mut features, func_cols);
    let flags = sig.flags();
    let coords = sig.coords();
    let step = build_kstep(&flags, config.k_step)?;
    let knn = build_knn_with(&coords, config.k_nn, config.knn_symmetrize);
    Ok(PreparedSignature {
        features,
        flags,
        coords,
        step,
        knn,
    })
}

/// One signature's forward pass: its tape, the bound parameter handles
/// (for reading gradients back), and the network trace.
pub struct Embedded {
    pub tape: Tape,
    pub bound: BoundParams,
    pub trace: NetworkTrace,
}

impl Embedded {
    pub fn output(&self) -> Var {
        self.trace.output
    }

    pub fn values(&self) -> &Array2<f64> {
        self.tape.value(self.trace.output)
    }
}

/// Forward pass on a fresh tape.
pub fn embed(
    prepared: &PreparedSignature,
    config: &NetworkConfig,
    params: &ParameterStore,
) -> Embedded {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let trace = network_forward_prepared(
        &mut tape,
        &prepared.features,
        &prepared.step,
        &prepared.knn,
        config,
        &bound,
    );
    Embedded { tape, bound, trace }
}

/// Forward pass returning just the embedded sequence values.
pub fn embed_value(
    prepared: &PreparedSignature,
    config: &NetworkConfig,
    params: &ParameterStore,
) -> Array2<f64> {
    embed(prepared, config, params).values().clone()
}
