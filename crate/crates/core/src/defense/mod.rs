//! Defender-side tooling: anomaly detection, elimination, recovery.

mod detect;
mod eliminate;

pub use detect::{
    detect, detect_cluster, detect_svd, neuron_features, svd_scores, DetectionReport, LayerDetection, Method,
    NeuronFeature, PrimitiveRate, MIN_WIDTH, RESTARTS,
};
pub use eliminate::{
    eliminate_dummy, parameter_distance, recover_with_reference, LayerElimination, RecoveryReport, COSINE_MIN,
    HASH_DECIMALS, RECOVER_TOL, ZERO_ABS, ZERO_REL,
};
