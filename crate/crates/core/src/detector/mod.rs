//! Temporal event detection on radar spectrograms.

pub mod geometry;
pub mod model;
pub mod train;

pub use geometry::{
    decode_interval, decode_offsets, decode_segment, encode_offsets, generate_anchors, iou_1d, nms_1d, nms_intervals,
    Anchor, Decoded,
};
pub use model::{events_in_chunk, merge_chunk_detections, DetectOutput, DetectorConfig, DetectorModel, LossParts, RangePool, TargetPlan, NUM_CLASSES};
pub use train::{class_weights, train_detector, validation_ap, DetectorSample, DetectorTrainConfig, DetectorTrainReport};
