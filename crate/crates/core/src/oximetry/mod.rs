//! SpO₂ cleaning, desaturation features, ODI₃ and score fusion.

mod clean;
mod features;
mod fusion;

pub use clean::{clean_trace, fully_invalid, MIN_FLUCTUATION};
pub use features::{
    count_desaturations, extract_features, odi3, segment_desaturations, Desaturation, SpO2Features, WindowFeatures,
    MIN_WINDOW, OD_THRESHOLD, WINDOW,
};
pub use fusion::{
    build_fusion_dataset, fuse_score, score_from_probabilities, soft_fuse, tune_omega, FusedDetection, FusionDataset,
    FusionNet, FusionSubject, FusionTrainReport, DEFAULT_OMEGA, EVENT_CLEARANCE, FEATURES, FUSION_CLASSES, HIDDEN,
    OMEGA_GRID,
};
